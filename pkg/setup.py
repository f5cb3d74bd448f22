from setuptools import setup

setup(
    name='ndvr-sim',
    version='0.1.0',
    packages=['ndvr'],
    url='',
    license='MIT',
    author='thomasvincent',
    author_email='thomasvincent@gmail.com',
    description='NDVR routing for NDN MANETs and a discrete-event simulator to evaluate it',
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.22',
        'cryptography>=3.4',
        'pandas>=1.3',
        'scipy>=1.7',
    ],
    entry_points={
        'console_scripts': ['ndvr=ndvr.cli:main'],
    },
)
